use super::scalar::Scalar;

/// Dense 4-D activation stored channel-major: `(channel, sample, row, col)`.
///
/// Keeping channels outermost turns every convolution into a single matrix
/// product over the whole batch and makes channel concatenation a plain
/// append.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            batch,
            height,
            width,
            data: vec![T::ZERO; channels * batch * height * width],
        }
    }

    pub fn from_vec(channels: usize, batch: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * batch * height * width, "tensor data length");
        Tensor {
            channels,
            batch,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements per channel (`batch * height * width`).
    #[inline]
    pub fn channel_len(&self) -> usize {
        self.batch * self.plane()
    }

    #[inline]
    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.batch + n) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, n, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let len = self.channel_len();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let len = self.channel_len();
        &mut self.data[c * len..(c + 1) * len]
    }

    /// Sample `n` of channel `c` as a row-major `height x width` slice.
    pub fn sample_plane(&self, c: usize, n: usize) -> &[T] {
        let p = self.plane();
        let start = (c * self.batch + n) * p;
        &self.data[start..start + p]
    }

    pub fn sample_plane_mut(&mut self, c: usize, n: usize) -> &mut [T] {
        let p = self.plane();
        let start = (c * self.batch + n) * p;
        &mut self.data[start..start + p]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(
            self.batch == other.batch && self.height == other.height && self.width == other.width,
            "concat needs matching batch and spatial size"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Splits off the first `channels` channels.
    pub fn split_channels(&self, channels: usize) -> (Tensor<T>, Tensor<T>) {
        let cut = channels * self.channel_len();
        (
            Tensor::from_vec(channels, self.batch, self.height, self.width, self.data[..cut].to_vec()),
            Tensor::from_vec(
                self.channels - channels,
                self.batch,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Tensor<T> {
        Tensor::zeros(self.channels, self.batch, self.height, self.width)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
