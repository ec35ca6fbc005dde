//! The encoder abstraction, embedding batches and prompt ensembling.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::image::{preprocess_image, ImageTensor};
use crate::prompts::TextPrompt;

/// Row-norm tolerance for a batch to count as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Output of an image encoder for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// `P × d` patch embeddings in raster order over the patch grid, when
    /// the encoder exposes them.
    pub patches: Option<Array2<f64>>,
    /// Pooled embedding in the shared space, unit length.
    pub pooled: Array1<f64>,
}

/// A dual image/text encoder mapping into a shared `d`-dimensional space.
///
/// Implementations are immutable after construction and shared across
/// threads through [`EncoderHandle`].
pub trait Encoder: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Side length expected by [`Encoder::encode_image`].
    fn input_side(&self) -> usize;

    fn params_version(&self) -> String;

    /// `(rows, cols)` of the patch grid.
    fn patch_grid(&self) -> (usize, usize);

    /// Encodes an image already passed through [`Encoder::prepare`].
    fn encode_image(&self, image: &ImageTensor) -> Result<ImageFeatures>;

    /// Unit-length text embedding.
    fn encode_text(&self, prompt: &TextPrompt) -> Result<Array1<f64>>;

    /// Resizes and standardizes a decoded image for this encoder.
    fn prepare(&self, raw: &ImageTensor) -> Result<ImageTensor> {
        preprocess_image(raw, self.input_side())
    }
}

pub type EncoderHandle = Arc<dyn Encoder>;

/// Image/text embedding matrices with aligned rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    image: Array2<f64>,
    text: Array2<f64>,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps the two matrices as given. The `normalized` flag is computed
    /// from the row norms.
    pub fn new(image: Array2<f64>, text: Array2<f64>) -> Result<Self> {
        if image.dim() != text.dim() {
            return Err(Error::Shape(format!(
                "image embeddings {:?} vs text embeddings {:?}",
                image.dim(),
                text.dim()
            )));
        }
        if image.ncols() < 2 {
            return Err(Error::Shape(format!("embedding dimension {} < 2", image.ncols())));
        }
        let normalized = rows_are_unit(&image) && rows_are_unit(&text);
        Ok(Self {
            image,
            text,
            normalized,
        })
    }

    /// Normalizes every row to unit length before wrapping.
    pub fn normalized(mut image: Array2<f64>, mut text: Array2<f64>) -> Result<Self> {
        normalize_rows(&mut image)?;
        normalize_rows(&mut text)?;
        Self::new(image, text)
    }

    pub fn image(&self) -> &Array2<f64> {
        &self.image
    }

    pub fn text(&self) -> &Array2<f64> {
        &self.text
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.image.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.image.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.image.ncols()
    }

    /// Rows `idx` of both matrices, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            image: self.image.select(Axis(0), idx),
            text: self.text.select(Axis(0), idx),
            normalized: self.normalized,
        }
    }
}

fn rows_are_unit(m: &Array2<f64>) -> bool {
    m.rows()
        .into_iter()
        .all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= UNIT_NORM_TOL)
}

/// Scales `v` to unit length. Zero or non-finite vectors are an error.
pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::NonFinite(format!("cannot normalize vector with norm {n}")));
    }
    Ok(v.mapv(|x| x / n))
}

pub fn normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::NonFinite(format!("cannot normalize row with norm {n}")));
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(())
}

fn check_dim(enc: &dyn Encoder, v: &Array1<f64>, what: &str) -> Result<()> {
    if v.len() != enc.dim() {
        return Err(Error::Shape(format!(
            "{what} embedding has dimension {}, encoder declares {}",
            v.len(),
            enc.dim()
        )));
    }
    Ok(())
}

/// Encodes aligned image/prompt pairs. Images are decoded originals and are
/// prepared for the encoder here.
pub fn encode_batch(enc: &dyn Encoder, images: &[ImageTensor], prompts: &[TextPrompt]) -> Result<EmbeddingBatch> {
    if images.len() != prompts.len() {
        return Err(Error::Shape(format!(
            "{} images but {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Empty("encode_batch needs at least one pair".into()));
    }
    let d = enc.dim();
    let mut img = Array2::zeros((images.len(), d));
    let mut txt = Array2::zeros((images.len(), d));
    for (i, (image, prompt)) in images.iter().zip(prompts).enumerate() {
        let pooled = enc.encode_image(&enc.prepare(image)?)?.pooled;
        check_dim(enc, &pooled, "image")?;
        let t = enc.encode_text(prompt)?;
        check_dim(enc, &t, "text")?;
        img.row_mut(i).assign(&pooled);
        txt.row_mut(i).assign(&t);
    }
    EmbeddingBatch::normalized(img, txt)
}

/// Mean of the prompts' text embeddings, renormalized to unit length.
pub fn ensemble_prompt_embedding(enc: &dyn Encoder, prompts: &[TextPrompt]) -> Result<Array1<f64>> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompt ensemble is empty".into()));
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for p in prompts {
        let t = enc.encode_text(p)?;
        check_dim(enc, &t, "text")?;
        rows.push(t);
    }
    // Sum in a canonical order so the result does not depend on list order.
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut sum = Array1::zeros(enc.dim());
    for r in &rows {
        sum += r;
    }
    l2_normalize(sum.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[derive(Debug)]
    struct Fixed;

    impl Encoder for Fixed {
        fn dim(&self) -> usize {
            2
        }
        fn input_side(&self) -> usize {
            16
        }
        fn params_version(&self) -> String {
            "fixed".into()
        }
        fn patch_grid(&self) -> (usize, usize) {
            (1, 1)
        }
        fn encode_image(&self, _: &ImageTensor) -> Result<ImageFeatures> {
            Ok(ImageFeatures {
                patches: None,
                pooled: array![1.0, 0.0],
            })
        }
        fn encode_text(&self, p: &TextPrompt) -> Result<Array1<f64>> {
            Ok(match p.text.as_str() {
                "first" => array![1.0, 0.0],
                "second" => array![0.0, 1.0],
                _ => array![0.6, 0.8, 0.0],
            })
        }
    }

    fn tp(s: &str) -> TextPrompt {
        TextPrompt::plain(s).unwrap()
    }

    #[test]
    fn orthogonal_prompts_average_to_diagonal() {
        let e = ensemble_prompt_embedding(&Fixed, &[tp("first"), tp("second")]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e[0] - h).abs() < 1e-15 && (e[1] - h).abs() < 1e-15);
    }

    #[test]
    fn duplicate_prompts_match_single() {
        let one = ensemble_prompt_embedding(&Fixed, &[tp("first")]).unwrap();
        let two = ensemble_prompt_embedding(&Fixed, &[tp("first"), tp("first")]).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn empty_ensemble_and_bad_dim_are_errors() {
        assert!(ensemble_prompt_embedding(&Fixed, &[]).is_err());
        assert!(matches!(
            ensemble_prompt_embedding(&Fixed, &[tp("other")]),
            Err(Error::Shape(_))
        ));
        let img = ImageTensor::filled(16, 16, [0.5; 3]).unwrap();
        assert!(encode_batch(&Fixed, &[img], &[tp("other")]).is_err());
    }

    #[test]
    fn batch_flags_normalization() {
        let b = EmbeddingBatch::new(array![[1.0, 0.0]], array![[0.0, 2.0]]).unwrap();
        assert!(!b.is_normalized());
        let b = EmbeddingBatch::normalized(array![[3.0, 4.0]], array![[0.0, 2.0]]).unwrap();
        assert!(b.is_normalized());
        assert!(EmbeddingBatch::new(array![[1.0]], array![[1.0]]).is_err());
        assert!(EmbeddingBatch::new(array![[1.0, 0.0]], array![[1.0, 0.0], [0.0, 1.0]]).is_err());
    }
}
