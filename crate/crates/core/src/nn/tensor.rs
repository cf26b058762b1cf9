use super::NnError;

/// Dense `batch × channels × height × width` array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks equally sized single-channel grids into an `n × 1 × h × w` batch.
    pub fn from_grids<'a>(grids: impl IntoIterator<Item = &'a crate::grid::Image>) -> Result<Self, NnError> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for g in grids {
            match dims {
                None => dims = Some(g.dims()),
                Some(d) if d != g.dims() => {
                    return Err(NnError::ShapeMismatch(format!("grid {:?} vs {d:?}", g.dims())))
                }
                _ => {}
            }
            data.extend_from_slice(g.as_slice());
            n += 1;
        }
        let (h, w) = dims.ok_or_else(|| NnError::ShapeMismatch("empty batch".into()))?;
        Ok(Tensor { shape: [n, 1, h, w], data })
    }

    /// Channel `c` of sample `n` as a grid.
    pub fn grid(&self, n: usize, c: usize) -> crate::grid::Image {
        let [_, ch, h, w] = self.shape;
        let start = (n * ch + c) * h * w;
        crate::grid::Grid::from_vec(h, w, self.data[start..start + h * w].to_vec())
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Contiguous `channels × h × w` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * per..(n + 1) * per]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * per..(n + 1) * per]
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(NnError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "tensor shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
